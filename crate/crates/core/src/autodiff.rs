//! Minimal reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every quantity is a dense row-major `f64` buffer. A [`Tape`] records the
//! forward pass as an append-only list of nodes (parents always precede
//! children), and [`Tape::backward`] replays it once in reverse, accumulating
//! gradients into every node. Shared subexpressions therefore sum their
//! contributions, which is what the chain rule requires on a DAG.
//!
//! Two non-standard operators carry the adversarial training semantics:
//! [`Tape::grad_reverse`] (identity forward, gradient scaled by `-coeff`
//! backward) and [`Tape::stop_gradient`] (identity forward, zero backward).

use thiserror::Error;

/// Probabilities are clamped to `[EPS_P, 1]` before any logarithm.
pub const EPS_P: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("argument error: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Dense tensor: shape plus row-major values, with an optional gradient
/// buffer (filled by the optimizer plumbing) and an optional tape handle.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<Var>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TapeError::Dimension {
                op: "tensor",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor { shape, values, grad: None, node_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None, node_id: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], grad: None, node_id: None }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cross-entropy targets: hard class indices or a dense one-hot matrix.
/// Targets never receive gradients.
#[derive(Debug, Clone)]
pub enum CeTargets {
    Indices(Vec<usize>),
    OneHot(Vec<f64>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { s: Var, x: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    AddBias { x: Var, bias: Var, rows: usize, cols: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxRows { x: Var, rows: usize, cols: usize },
    Outer { p: Var, q: Var, c_p: usize, c_q: usize },
    RowOuterFlatten { z: Var, p: Var, rows: usize, zc: usize, pc: usize },
    Trace { m: Var, n: usize },
    Sum { x: Var },
    GradReverse { x: Var, coeff: f64 },
    StopGradient { x: Var },
    CrossEntropy {
        probs: Var,
        rows: usize,
        cols: usize,
        targets: CeTargets,
        weights: Option<Vec<f64>>,
        normalizer: f64,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Append-only record of one forward pass. Single-threaded by construction.
pub struct Tape {
    nodes: Vec<Node>,
}

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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar nodes hold exactly one value.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, name: &'static str) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, shape, values });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input or parameter buffer as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, shape: t.shape.clone(), values: t.values.clone() });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from raw parts, for batch matrices built on the fly.
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TapeError::Dimension {
                op: "input",
                detail: format!("shape {:?} vs {} values", shape, values.len()),
            });
        }
        self.nodes.push(Node { op: Op::Leaf, shape, values });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.nodes.push(Node { op: Op::Leaf, shape: vec![], values: vec![v] });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(TapeError::Dimension { op, detail: format!("expected matrix, got shape {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    fn is_scalar(&self, v: Var) -> bool {
        self.nodes[v.0].values.len() == 1
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TapeError::Dimension {
                op: "matmul",
                detail: format!("inner dims {} vs {}", k, k2),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TapeError::Dimension {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add { a, b }, shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sub { a, b }, shape, out, "sub")
    }

    /// Elementwise product. Broadcasting exists only for the scalar-times-tensor case.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            let out: Vec<f64> = self.nodes[a.0]
                .values
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(x, y)| x * y)
                .collect();
            let shape = self.nodes[a.0].shape.clone();
            return self.push(Op::Mul { a, b }, shape, out, "mul");
        }
        let (s, x) = if self.is_scalar(a) {
            (a, b)
        } else if self.is_scalar(b) {
            (b, a)
        } else {
            return Err(TapeError::Dimension {
                op: "mul",
                detail: format!(
                    "shapes {:?} vs {:?} (only scalar*tensor broadcasts)",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        };
        let sv = self.nodes[s.0].values[0];
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| sv * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::MulScalar { s, x }, shape, out, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, out, "scale")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| c + v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddConst { x }, shape, out, "add_const")
    }

    /// Adds a length-`cols` bias vector to every row of a `rows x cols` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_bias")?;
        if self.nodes[bias.0].values.len() != cols {
            return Err(TapeError::Dimension {
                op: "add_bias",
                detail: format!("bias len {} vs {} cols", self.nodes[bias.0].values.len(), cols),
            });
        }
        let mut out = self.nodes[x.0].values.clone();
        let bv = &self.nodes[bias.0].values;
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bv[c];
            }
        }
        self.push(Op::AddBias { x, bias, rows, cols }, vec![rows, cols], out, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu { x }, shape, out, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sigmoid { x }, shape, out, "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.nodes[x.0].values.iter().find(|v| **v <= 0.0) {
            return Err(TapeError::Domain {
                op: "log",
                detail: format!("log of non-positive value {v}"),
            });
        }
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Log { x }, shape, out, "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Exp { x }, shape, out, "exp")
    }

    /// Clamp with gradient pass-through strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Clamp { x, lo, hi }, shape, out, "clamp")
    }

    /// Row-wise softmax of a `rows x cols` matrix. Rows sum to 1.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        self.push(Op::SoftmaxRows { x, rows, cols }, vec![rows, cols], out, "softmax_rows")
    }

    /// Outer product of two vectors: `out[i][j] = p[i] * q[j]`.
    pub fn outer(&mut self, p: Var, q: Var) -> Result<Var> {
        let sp = &self.nodes[p.0].shape;
        let sq = &self.nodes[q.0].shape;
        if sp.len() != 1 || sq.len() != 1 {
            return Err(TapeError::Dimension {
                op: "outer",
                detail: format!("expected vectors, got {:?} and {:?}", sp, sq),
            });
        }
        let (c_p, c_q) = (sp[0], sq[0]);
        let mut out = vec![0.0; c_p * c_q];
        for i in 0..c_p {
            for j in 0..c_q {
                out[i * c_q + j] = self.nodes[p.0].values[i] * self.nodes[q.0].values[j];
            }
        }
        self.push(Op::Outer { p, q, c_p, c_q }, vec![c_p, c_q], out, "outer")
    }

    /// Per-row outer product, flattened: `(B x Z, B x P) -> B x (Z*P)`.
    /// This is the conditioning map for the conditional domain discriminator.
    pub fn row_outer_flatten(&mut self, z: Var, p: Var) -> Result<Var> {
        let (rows, zc) = self.dims2(z, "row_outer_flatten")?;
        let (rows2, pc) = self.dims2(p, "row_outer_flatten")?;
        if rows != rows2 {
            return Err(TapeError::Dimension {
                op: "row_outer_flatten",
                detail: format!("row counts {} vs {}", rows, rows2),
            });
        }
        let zv = &self.nodes[z.0].values;
        let pv = &self.nodes[p.0].values;
        let mut out = vec![0.0; rows * zc * pc];
        for r in 0..rows {
            for i in 0..zc {
                for j in 0..pc {
                    out[r * zc * pc + i * pc + j] = zv[r * zc + i] * pv[r * pc + j];
                }
            }
        }
        self.push(
            Op::RowOuterFlatten { z, p, rows, zc, pc },
            vec![rows, zc * pc],
            out,
            "row_outer_flatten",
        )
    }

    pub fn trace(&mut self, m: Var) -> Result<Var> {
        let (r, c) = self.dims2(m, "trace")?;
        if r != c {
            return Err(TapeError::Dimension { op: "trace", detail: format!("non-square {r}x{c}") });
        }
        let t: f64 = (0..r).map(|i| self.nodes[m.0].values[i * c + i]).sum();
        self.push(Op::Trace { m, n: r }, vec![], vec![t], "trace")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        self.push(Op::Sum { x }, vec![], vec![s], "sum")
    }

    /// Identity forward; backward multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Result<Var> {
        if coeff < 0.0 {
            return Err(TapeError::Argument(format!("grad_reverse coeff must be >= 0, got {coeff}")));
        }
        let out = self.nodes[x.0].values.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::GradReverse { x, coeff }, shape, out, "grad_reverse")
    }

    /// Identity forward; contributes nothing to any ancestor gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].values.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::StopGradient { x }, shape, out, "stop_gradient")
    }

    /// Mean cross-entropy over a batch of probability rows.
    pub fn cross_entropy(&mut self, probs: Var, targets: CeTargets) -> Result<Var> {
        let (rows, _cols) = self.dims2(probs, "cross_entropy")?;
        if rows == 0 {
            return Err(TapeError::Argument("cross_entropy on empty batch".into()));
        }
        self.cross_entropy_weighted(probs, targets, None, rows as f64)
    }

    /// Weighted cross-entropy: `sum_b w_b * ce_b / normalizer`. A zero
    /// normalizer (nothing accepted) yields an exact constant zero.
    pub fn cross_entropy_weighted(
        &mut self,
        probs: Var,
        targets: CeTargets,
        weights: Option<Vec<f64>>,
        normalizer: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.dims2(probs, "cross_entropy")?;
        match &targets {
            CeTargets::Indices(idx) => {
                if idx.len() != rows {
                    return Err(TapeError::Dimension {
                        op: "cross_entropy",
                        detail: format!("{} labels for {} rows", idx.len(), rows),
                    });
                }
                if let Some(bad) = idx.iter().find(|&&l| l >= cols) {
                    return Err(TapeError::Index {
                        op: "cross_entropy",
                        detail: format!("label {bad} >= {cols} classes"),
                    });
                }
            }
            CeTargets::OneHot(q) => {
                if q.len() != rows * cols {
                    return Err(TapeError::Dimension {
                        op: "cross_entropy",
                        detail: format!("one-hot len {} vs {}x{}", q.len(), rows, cols),
                    });
                }
            }
        }
        if let Some(w) = &weights {
            if w.len() != rows {
                return Err(TapeError::Dimension {
                    op: "cross_entropy",
                    detail: format!("{} weights for {} rows", w.len(), rows),
                });
            }
        }
        if normalizer == 0.0 {
            return self.push(
                Op::CrossEntropy {
                    probs,
                    rows,
                    cols,
                    targets,
                    weights,
                    normalizer,
                },
                vec![],
                vec![0.0],
                "cross_entropy",
            );
        }
        let pv = &self.nodes[probs.0].values;
        let mut total = 0.0;
        for r in 0..rows {
            let w = weights.as_ref().map_or(1.0, |w| w[r]);
            if w == 0.0 {
                continue;
            }
            let row_ce = match &targets {
                CeTargets::Indices(idx) => -pv[r * cols + idx[r]].clamp(EPS_P, 1.0).ln(),
                CeTargets::OneHot(q) => {
                    let mut s = 0.0;
                    for c in 0..cols {
                        let qv = q[r * cols + c];
                        if qv != 0.0 {
                            s -= qv * pv[r * cols + c].clamp(EPS_P, 1.0).ln();
                        }
                    }
                    s
                }
            };
            total += w * row_ce;
        }
        let val = total / normalizer;
        self.push(
            Op::CrossEntropy { probs, rows, cols, targets, weights, normalizer },
            vec![],
            vec![val],
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar root. Returns one gradient buffer per node;
    /// index with [`Tape::grad_of`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].values.len() != 1 {
            return Err(TapeError::Argument("backward root must be scalar".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        grads[root.0][0] = 1.0;
        for id in (0..=root.0).rev() {
            // Cheap skip: untouched subgraphs stay zero.
            if grads[id].iter().all(|g| *g == 0.0) {
                continue;
            }
            let g_out = std::mem::take(&mut grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = g_out;
                    continue;
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    {
                        let ga = &mut grads[a.0];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g_out[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    {
                        let gb = &mut grads[b.0];
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + p] * g_out[i * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (g, go) in grads[a.0].iter_mut().zip(&g_out) {
                        *g += go;
                    }
                    for (g, go) in grads[b.0].iter_mut().zip(&g_out) {
                        *g += go;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, go) in grads[a.0].iter_mut().zip(&g_out) {
                        *g += go;
                    }
                    for (g, go) in grads[b.0].iter_mut().zip(&g_out) {
                        *g -= go;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for i in 0..g_out.len() {
                        let bv = self.nodes[b.0].values[i];
                        grads[a.0][i] += g_out[i] * bv;
                    }
                    for i in 0..g_out.len() {
                        let av = self.nodes[a.0].values[i];
                        grads[b.0][i] += g_out[i] * av;
                    }
                }
                Op::MulScalar { s, x } => {
                    let (s, x) = (*s, *x);
                    let sv = self.nodes[s.0].values[0];
                    let mut acc = 0.0;
                    for i in 0..g_out.len() {
                        acc += g_out[i] * self.nodes[x.0].values[i];
                        grads[x.0][i] += g_out[i] * sv;
                    }
                    grads[s.0][0] += acc;
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    for (g, go) in grads[x.0].iter_mut().zip(&g_out) {
                        *g += c * go;
                    }
                }
                Op::AddConst { x } => {
                    for (g, go) in grads[x.0].iter_mut().zip(&g_out) {
                        *g += go;
                    }
                }
                Op::AddBias { x, bias, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    for (g, go) in grads[x.0].iter_mut().zip(&g_out) {
                        *g += go;
                    }
                    let gb = &mut grads[bias.0];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g_out[r * cols + c];
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    for i in 0..g_out.len() {
                        // Subgradient at exactly 0 is taken as 0.
                        if self.nodes[x.0].values[i] > 0.0 {
                            grads[x.0][i] += g_out[i];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    for i in 0..g_out.len() {
                        let y = self.nodes[id].values[i];
                        grads[x.0][i] += g_out[i] * y * (1.0 - y);
                    }
                }
                Op::Log { x } => {
                    let x = *x;
                    for i in 0..g_out.len() {
                        grads[x.0][i] += g_out[i] / self.nodes[x.0].values[i];
                    }
                }
                Op::Exp { x } => {
                    let x = *x;
                    for i in 0..g_out.len() {
                        grads[x.0][i] += g_out[i] * self.nodes[id].values[i];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    for i in 0..g_out.len() {
                        let v = self.nodes[x.0].values[i];
                        if v > lo && v < hi {
                            grads[x.0][i] += g_out[i];
                        }
                    }
                }
                Op::SoftmaxRows { x, rows, cols } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    for r in 0..rows {
                        let y = &self.nodes[id].values[r * cols..(r + 1) * cols];
                        let go = &g_out[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(go).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            grads[x.0][r * cols + c] += y[c] * (go[c] - dot);
                        }
                    }
                }
                Op::Outer { p, q, c_p, c_q } => {
                    let (p, q, c_p, c_q) = (*p, *q, *c_p, *c_q);
                    for i in 0..c_p {
                        let mut s = 0.0;
                        for j in 0..c_q {
                            s += g_out[i * c_q + j] * self.nodes[q.0].values[j];
                        }
                        grads[p.0][i] += s;
                    }
                    for j in 0..c_q {
                        let mut s = 0.0;
                        for i in 0..c_p {
                            s += g_out[i * c_q + j] * self.nodes[p.0].values[i];
                        }
                        grads[q.0][j] += s;
                    }
                }
                Op::RowOuterFlatten { z, p, rows, zc, pc } => {
                    let (z, p, rows, zc, pc) = (*z, *p, *rows, *zc, *pc);
                    for r in 0..rows {
                        for i in 0..zc {
                            let mut s = 0.0;
                            for j in 0..pc {
                                s += g_out[r * zc * pc + i * pc + j] * self.nodes[p.0].values[r * pc + j];
                            }
                            grads[z.0][r * zc + i] += s;
                        }
                        for j in 0..pc {
                            let mut s = 0.0;
                            for i in 0..zc {
                                s += g_out[r * zc * pc + i * pc + j] * self.nodes[z.0].values[r * zc + i];
                            }
                            grads[p.0][r * pc + j] += s;
                        }
                    }
                }
                Op::Trace { m, n } => {
                    let (m, n) = (*m, *n);
                    for i in 0..n {
                        grads[m.0][i * n + i] += g_out[0];
                    }
                }
                Op::Sum { x } => {
                    for g in grads[x.0].iter_mut() {
                        *g += g_out[0];
                    }
                }
                Op::GradReverse { x, coeff } => {
                    let (x, coeff) = (*x, *coeff);
                    for i in 0..g_out.len() {
                        grads[x.0][i] += -coeff * g_out[i];
                    }
                }
                Op::StopGradient { x } => {
                    // Parents precede children on the tape; nothing flows back.
                    debug_assert!(x.0 < id);
                }
                Op::CrossEntropy { probs, rows, cols, targets, weights, normalizer } => {
                    if *normalizer != 0.0 {
                        let (probs, rows, cols) = (*probs, *rows, *cols);
                        let norm = *normalizer;
                        let g0 = g_out[0];
                        for r in 0..rows {
                            let w = weights.as_ref().map_or(1.0, |w| w[r]);
                            if w == 0.0 {
                                continue;
                            }
                            match targets {
                                CeTargets::Indices(idx) => {
                                    let c = idx[r];
                                    let pval = self.nodes[probs.0].values[r * cols + c];
                                    if pval > EPS_P {
                                        grads[probs.0][r * cols + c] += g0 * (-w / (norm * pval));
                                    }
                                }
                                CeTargets::OneHot(q) => {
                                    for c in 0..cols {
                                        let qv = q[r * cols + c];
                                        if qv == 0.0 {
                                            continue;
                                        }
                                        let pval = self.nodes[probs.0].values[r * cols + c];
                                        if pval > EPS_P {
                                            grads[probs.0][r * cols + c] += g0 * (-w * qv / (norm * pval));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            grads[id] = g_out;
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradient buffers produced by a backward pass.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
