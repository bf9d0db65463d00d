//! Dense 2-d tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation executed during a forward pass and
//! replays them in reverse to accumulate gradients. Tensors live in the
//! tape's arena and are addressed by lightweight [`Var`] handles. Learnable
//! parameters live outside any tape in a [`ParamStore`]; registering a
//! parameter on a tape shares its buffer (no copy) and after `backward`
//! the tape's gradients are folded back into the store.
//!
//! Everything is 64-bit. Shapes are `[rows, cols]`; row vectors are
//! `[1, n]`. There is no broadcasting except the explicit row-vector bias
//! form of [`Tape::add_bias`]. Shape mismatches panic with both shapes in
//! the message.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a tensor in a tape arena. Cheap to copy, valid only for the
/// tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

enum Src {
    Leaf { param: Option<usize> },
    Op(OpRecord),
}

enum OpRecord {
    Matmul { a: Var, b: Var },
    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `[m,n] + [1,n]`, the one permitted broadcast.
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Ln { x: Var },
    Scale { x: Var, k: f64 },
    /// Row-wise softmax with max-subtraction.
    Softmax { x: Var },
    ConcatCols { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    /// Sum of selected flat elements, a `[1,1]` scalar.
    GatherSum { x: Var, ids: Vec<usize> },
    AddN { parts: Vec<Var> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Storage,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    src: Src,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Reverse-mode gradient tape. Confined to one thread; distinct tapes on
/// distinct threads may run concurrently with no sharing.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    /// Registered parameters, so repeated `param` calls share one node
    /// (and one gradient buffer).
    param_cache: HashMap<usize, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
                param_cache: HashMap::new(),
            }),
        }
    }

    /// Tensor that does not participate in gradients (inputs, masks).
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(
            data.len(),
            rows * cols,
            "constant: data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(data),
            grad: None,
            requires_grad: false,
            src: Src::Leaf { param: None },
        })
    }

    /// Register a parameter from a store. The data buffer is shared, not
    /// copied; gradients reach the store via [`Tape::backward`] +
    /// [`Tape::fold_param_grads`] (or [`Tape::take_param_grads`]).
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.inner.borrow().param_cache.get(&id.0) {
            return *v;
        }
        let p = &store.params[id.0];
        let v = self.push(Node {
            rows: p.rows,
            cols: p.cols,
            data: Storage::Shared(p.data.clone()),
            grad: None,
            requires_grad: true,
            src: Src::Leaf { param: Some(id.0) },
        });
        self.inner.borrow_mut().param_cache.insert(id.0, v);
        v
    }

    /// Leaf with gradient tracking that is not a stored parameter. Used by
    /// gradient checks on intermediate inputs.
    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(
            data.len(),
            rows * cols,
            "leaf: data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(data),
            grad: None,
            requires_grad: true,
            src: Src::Leaf { param: None },
        })
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "tape already consumed by backward");
        inner.nodes.push(node);
        Var(inner.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let inner = self.inner.borrow();
        let n = &inner.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Copy of the forward value.
    pub fn value(&self, v: Var) -> Vec<f64> {
        self.inner.borrow().nodes[v.0].data.as_slice().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let n = &inner.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar tensor");
        n.data.as_slice()[0]
    }

    /// Copy of the accumulated gradient, if any flowed to `v`.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.inner.borrow().nodes[v.0].grad.clone()
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let inner = self.inner.borrow();
        let (m, k) = (inner.nodes[a.0].rows, inner.nodes[a.0].cols);
        let (k2, n) = (inner.nodes[b.0].rows, inner.nodes[b.0].cols);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ, lhs [{m}, {k}] vs rhs [{k2}, {n}]"
        );
        let mut out = vec![0.0; m * n];
        dgemm_rm(
            m,
            k,
            n,
            inner.nodes[a.0].data.as_slice(),
            false,
            inner.nodes[b.0].data.as_slice(),
            false,
            0.0,
            &mut out,
        );
        let rg = inner.nodes[a.0].requires_grad || inner.nodes[b.0].requires_grad;
        drop(inner);
        self.push(Node {
            rows: m,
            cols: n,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::Matmul { a, b }),
        })
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let inner = self.inner.borrow();
        let (m, k) = (inner.nodes[a.0].rows, inner.nodes[a.0].cols);
        let (n, k2) = (inner.nodes[b.0].rows, inner.nodes[b.0].cols);
        assert_eq!(
            k, k2,
            "matmul_nt: inner dimensions differ, lhs [{m}, {k}] vs rhsᵀ of [{n}, {k2}]"
        );
        let mut out = vec![0.0; m * n];
        dgemm_rm(
            m,
            k,
            n,
            inner.nodes[a.0].data.as_slice(),
            false,
            inner.nodes[b.0].data.as_slice(),
            true,
            0.0,
            &mut out,
        );
        let rg = inner.nodes[a.0].requires_grad || inner.nodes[b.0].requires_grad;
        drop(inner);
        self.push(Node {
            rows: m,
            cols: n,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::MatmulNt { a, b }),
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "add", |x, y| x + y, |a, b| OpRecord::Add { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, |a, b| OpRecord::Mul { a, b })
    }

    fn binary_elementwise(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        rec: impl Fn(Var, Var) -> OpRecord,
    ) -> Var {
        let inner = self.inner.borrow();
        let (ra, ca) = (inner.nodes[a.0].rows, inner.nodes[a.0].cols);
        let (rb, cb) = (inner.nodes[b.0].rows, inner.nodes[b.0].cols);
        assert_eq!(
            (ra, ca),
            (rb, cb),
            "{name}: operand shapes differ, [{ra}, {ca}] vs [{rb}, {cb}]"
        );
        let out: Vec<f64> = inner.nodes[a.0]
            .data
            .as_slice()
            .iter()
            .zip(inner.nodes[b.0].data.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = inner.nodes[a.0].requires_grad || inner.nodes[b.0].requires_grad;
        drop(inner);
        self.push(Node {
            rows: ra,
            cols: ca,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(rec(a, b)),
        })
    }

    /// `[m,n] + [1,n]` row-vector bias.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let inner = self.inner.borrow();
        let (m, n) = (inner.nodes[a.0].rows, inner.nodes[a.0].cols);
        let (rb, nb) = (inner.nodes[bias.0].rows, inner.nodes[bias.0].cols);
        assert!(
            rb == 1 && nb == n,
            "add_bias: bias must be [1, {n}], got [{rb}, {nb}] against [{m}, {n}]"
        );
        let av = inner.nodes[a.0].data.as_slice();
        let bv = inner.nodes[bias.0].data.as_slice();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(av[r * n + c] + bv[c]);
            }
        }
        let rg = inner.nodes[a.0].requires_grad || inner.nodes[bias.0].requires_grad;
        drop(inner);
        self.push(Node {
            rows: m,
            cols: n,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::AddBias { a, bias }),
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, |x| OpRecord::Tanh { x })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |x| OpRecord::Sigmoid { x })
    }

    /// Natural log; domain `x > 0`.
    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x| OpRecord::Ln { x })
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, |x| OpRecord::Scale { x, k })
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, rec: impl Fn(Var) -> OpRecord) -> Var {
        let inner = self.inner.borrow();
        let n = &inner.nodes[x.0];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        let out: Vec<f64> = n.data.as_slice().iter().map(|&v| f(v)).collect();
        drop(inner);
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(rec(x)),
        })
    }

    /// Row-wise softmax, computed with max-subtraction.
    pub fn softmax(&self, x: Var) -> Var {
        let inner = self.inner.borrow();
        let n = &inner.nodes[x.0];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        let xs = n.data.as_slice();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        drop(inner);
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::Softmax { x }),
        })
    }

    /// Concatenate along columns; all parts must have the same row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let inner = self.inner.borrow();
        let rows = inner.nodes[parts[0].0].rows;
        let mut cols = 0;
        let mut rg = false;
        for p in parts {
            let n = &inner.nodes[p.0];
            assert_eq!(
                n.rows, rows,
                "concat_cols: row counts differ, [{rows}, _] vs [{}, {}]",
                n.rows, n.cols
            );
            cols += n.cols;
            rg |= n.requires_grad;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let n = &inner.nodes[p.0];
            let src = n.data.as_slice();
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + n.cols]
                    .copy_from_slice(&src[r * n.cols..(r + 1) * n.cols]);
            }
            offset += n.cols;
        }
        drop(inner);
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::ConcatCols {
                parts: parts.to_vec(),
            }),
        })
    }

    /// Stack row vectors `[1,n]` into `[k,n]`.
    pub fn stack_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: empty part list");
        let inner = self.inner.borrow();
        let cols = inner.nodes[parts[0].0].cols;
        let mut rg = false;
        let mut out = Vec::with_capacity(parts.len() * cols);
        for p in parts {
            let n = &inner.nodes[p.0];
            assert_eq!(
                (n.rows, n.cols),
                (1, cols),
                "stack_rows: want [1, {cols}], got [{}, {}]",
                n.rows,
                n.cols
            );
            out.extend_from_slice(n.data.as_slice());
            rg |= n.requires_grad;
        }
        drop(inner);
        self.push(Node {
            rows: parts.len(),
            cols,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::StackRows {
                parts: parts.to_vec(),
            }),
        })
    }

    /// Column slice `[.., start..start+len]`.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let inner = self.inner.borrow();
        let n = &inner.nodes[x.0];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        assert!(
            start + len <= cols,
            "slice_cols: range {start}..{} out of bounds for [{rows}, {cols}]",
            start + len
        );
        let src = n.data.as_slice();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        drop(inner);
        self.push(Node {
            rows,
            cols: len,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::SliceCols { x, start, len }),
        })
    }

    /// Row lookup into an embedding table; backward scatter-adds.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let inner = self.inner.borrow();
        let n = &inner.nodes[table.0];
        let (v, d, rg) = (n.rows, n.cols, n.requires_grad);
        let src = n.data.as_slice();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(
                id < v,
                "gather_rows: id {id} out of range for table with {v} rows"
            );
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        drop(inner);
        self.push(Node {
            rows: ids.len(),
            cols: d,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::GatherRows {
                table,
                ids: ids.to_vec(),
            }),
        })
    }

    /// Sum of the flat elements at `ids`, as a `[1,1]` scalar.
    pub fn gather_sum(&self, x: Var, ids: &[usize]) -> Var {
        let inner = self.inner.borrow();
        let n = &inner.nodes[x.0];
        let len = n.len();
        let src = n.data.as_slice();
        let mut s = 0.0;
        for &id in ids {
            assert!(
                id < len,
                "gather_sum: index {id} out of range for {len} elements"
            );
            s += src[id];
        }
        let rg = n.requires_grad;
        drop(inner);
        self.push(Node {
            rows: 1,
            cols: 1,
            data: Storage::Owned(vec![s]),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::GatherSum {
                x,
                ids: ids.to_vec(),
            }),
        })
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add_n(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: empty part list");
        let inner = self.inner.borrow();
        let (rows, cols) = (inner.nodes[parts[0].0].rows, inner.nodes[parts[0].0].cols);
        let mut out = vec![0.0; rows * cols];
        let mut rg = false;
        for p in parts {
            let n = &inner.nodes[p.0];
            assert_eq!(
                (n.rows, n.cols),
                (rows, cols),
                "add_n: shapes differ, [{rows}, {cols}] vs [{}, {}]",
                n.rows,
                n.cols
            );
            for (o, &v) in out.iter_mut().zip(n.data.as_slice()) {
                *o += v;
            }
            rg |= n.requires_grad;
        }
        drop(inner);
        self.push(Node {
            rows,
            cols,
            data: Storage::Owned(out),
            grad: None,
            requires_grad: rg,
            src: Src::Op(OpRecord::AddN {
                parts: parts.to_vec(),
            }),
        })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// requires-grad tensor reachable from `loss` and marks the tape
    /// consumed; recording further ops or a second backward panics.
    pub fn backward(&self, loss: Var) {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "tape already consumed by backward");
        {
            let n = &inner.nodes[loss.0];
            assert_eq!(
                (n.rows, n.cols),
                (1, 1),
                "backward: loss must be a scalar, got [{}, {}]",
                n.rows,
                n.cols
            );
        }
        inner.consumed = true;
        inner.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..inner.nodes.len()).rev() {
            if inner.nodes[i].grad.is_none() || !inner.nodes[i].requires_grad {
                continue;
            }
            let grad = inner.nodes[i].grad.take().expect("grad present");
            backward_op(&mut inner.nodes, i, &grad);
            inner.nodes[i].grad = Some(grad);
        }
    }

    /// Fold parameter gradients back into the store, accumulating.
    pub fn fold_param_grads(&self, store: &mut ParamStore) {
        let inner = self.inner.borrow();
        for n in &inner.nodes {
            if let (Src::Leaf { param: Some(id) }, Some(g)) = (&n.src, &n.grad) {
                for (acc, &v) in store.params[*id].grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Extract parameter gradients keyed by raw param index. Used when
    /// accumulating across tapes from worker threads in a fixed order.
    pub fn take_param_grads(&self) -> HashMap<usize, Vec<f64>> {
        let mut inner = self.inner.borrow_mut();
        let mut out: HashMap<usize, Vec<f64>> = HashMap::new();
        for n in inner.nodes.iter_mut() {
            if let Src::Leaf { param: Some(id) } = n.src {
                if let Some(g) = n.grad.take() {
                    out.entry(id)
                        .and_modify(|acc| {
                            for (a, &v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        })
                        .or_insert(g);
                }
            }
        }
        out
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

/// Row-major dgemm wrapper: `c = op(a)·op(b) + beta·c`.
fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
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

fn ensure_grad(nodes: &mut [Node], v: Var) -> bool {
    if !nodes[v.0].requires_grad {
        return false;
    }
    if nodes[v.0].grad.is_none() {
        let len = nodes[v.0].len();
        nodes[v.0].grad = Some(vec![0.0; len]);
    }
    true
}

fn backward_op(nodes: &mut Vec<Node>, i: usize, grad: &[f64]) {
    // Inputs always precede node i on the tape, so the indexed accesses
    // below touch disjoint nodes.
    let src = std::mem::replace(&mut nodes[i].src, Src::Leaf { param: None });
    match &src {
        Src::Leaf { .. } => {}
        Src::Op(op) => match op {
            OpRecord::Matmul { a, b } => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if ensure_grad(nodes, *a) {
                    // dA += dC · Bᵀ
                    let bd = nodes[b.0].data.clone();
                    let ga = nodes[a.0].grad.as_mut().expect("grad");
                    dgemm_rm(m, n, k, grad, false, bd.as_slice(), true, 1.0, ga);
                }
                if ensure_grad(nodes, *b) {
                    // dB += Aᵀ · dC
                    let ad = nodes[a.0].data.clone();
                    let gb = nodes[b.0].grad.as_mut().expect("grad");
                    dgemm_rm(k, m, n, ad.as_slice(), true, grad, false, 1.0, gb);
                }
            }
            OpRecord::MatmulNt { a, b } => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].rows;
                if ensure_grad(nodes, *a) {
                    // dA += dC · B
                    let bd = nodes[b.0].data.clone();
                    let ga = nodes[a.0].grad.as_mut().expect("grad");
                    dgemm_rm(m, n, k, grad, false, bd.as_slice(), false, 1.0, ga);
                }
                if ensure_grad(nodes, *b) {
                    // dB += dCᵀ · A
                    let ad = nodes[a.0].data.clone();
                    let gb = nodes[b.0].grad.as_mut().expect("grad");
                    dgemm_rm(n, m, k, grad, true, ad.as_slice(), false, 1.0, gb);
                }
            }
            OpRecord::Add { a, b } => {
                for v in [*a, *b] {
                    if ensure_grad(nodes, v) {
                        let g = nodes[v.0].grad.as_mut().expect("grad");
                        for (gi, &di) in g.iter_mut().zip(grad) {
                            *gi += di;
                        }
                    }
                }
            }
            OpRecord::AddBias { a, bias } => {
                if ensure_grad(nodes, *a) {
                    let g = nodes[a.0].grad.as_mut().expect("grad");
                    for (gi, &di) in g.iter_mut().zip(grad) {
                        *gi += di;
                    }
                }
                if ensure_grad(nodes, *bias) {
                    let n = nodes[bias.0].cols;
                    let rows = grad.len() / n;
                    let g = nodes[bias.0].grad.as_mut().expect("grad");
                    for r in 0..rows {
                        for c in 0..n {
                            g[c] += grad[r * n + c];
                        }
                    }
                }
            }
            OpRecord::Mul { a, b } => {
                if ensure_grad(nodes, *a) {
                    let bd = nodes[b.0].data.clone();
                    let g = nodes[a.0].grad.as_mut().expect("grad");
                    for ((gi, &di), &bi) in g.iter_mut().zip(grad).zip(bd.as_slice()) {
                        *gi += di * bi;
                    }
                }
                if ensure_grad(nodes, *b) {
                    let ad = nodes[a.0].data.clone();
                    let g = nodes[b.0].grad.as_mut().expect("grad");
                    for ((gi, &di), &ai) in g.iter_mut().zip(grad).zip(ad.as_slice()) {
                        *gi += di * ai;
                    }
                }
            }
            OpRecord::Tanh { x } => {
                if ensure_grad(nodes, *x) {
                    let y = nodes[i].data.clone();
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for ((gi, &di), &yi) in g.iter_mut().zip(grad).zip(y.as_slice()) {
                        *gi += di * (1.0 - yi * yi);
                    }
                }
            }
            OpRecord::Sigmoid { x } => {
                if ensure_grad(nodes, *x) {
                    let y = nodes[i].data.clone();
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for ((gi, &di), &yi) in g.iter_mut().zip(grad).zip(y.as_slice()) {
                        *gi += di * yi * (1.0 - yi);
                    }
                }
            }
            OpRecord::Ln { x } => {
                if ensure_grad(nodes, *x) {
                    let xd = nodes[x.0].data.clone();
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for ((gi, &di), &xi) in g.iter_mut().zip(grad).zip(xd.as_slice()) {
                        *gi += di / xi;
                    }
                }
            }
            OpRecord::Scale { x, k } => {
                if ensure_grad(nodes, *x) {
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for (gi, &di) in g.iter_mut().zip(grad) {
                        *gi += di * k;
                    }
                }
            }
            OpRecord::Softmax { x } => {
                if ensure_grad(nodes, *x) {
                    let y = nodes[i].data.clone();
                    let y = y.as_slice();
                    let cols = nodes[i].cols;
                    let rows = nodes[i].rows;
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| grad[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            g[base + c] += y[base + c] * (grad[base + c] - dot);
                        }
                    }
                }
            }
            OpRecord::ConcatCols { parts } => {
                let cols = nodes[i].cols;
                let rows = nodes[i].rows;
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].cols;
                    if ensure_grad(nodes, *p) {
                        let g = nodes[p.0].grad.as_mut().expect("grad");
                        for r in 0..rows {
                            for c in 0..pc {
                                g[r * pc + c] += grad[r * cols + offset + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            OpRecord::StackRows { parts } => {
                let cols = nodes[i].cols;
                for (r, p) in parts.iter().enumerate() {
                    if ensure_grad(nodes, *p) {
                        let g = nodes[p.0].grad.as_mut().expect("grad");
                        for c in 0..cols {
                            g[c] += grad[r * cols + c];
                        }
                    }
                }
            }
            OpRecord::SliceCols { x, start, len } => {
                if ensure_grad(nodes, *x) {
                    let cols = nodes[x.0].cols;
                    let rows = nodes[x.0].rows;
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for r in 0..rows {
                        for c in 0..*len {
                            g[r * cols + start + c] += grad[r * len + c];
                        }
                    }
                }
            }
            OpRecord::GatherRows { table, ids } => {
                if ensure_grad(nodes, *table) {
                    let d = nodes[table.0].cols;
                    let g = nodes[table.0].grad.as_mut().expect("grad");
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += grad[r * d + c];
                        }
                    }
                }
            }
            OpRecord::GatherSum { x, ids } => {
                if ensure_grad(nodes, *x) {
                    let g = nodes[x.0].grad.as_mut().expect("grad");
                    for &id in ids {
                        g[id] += grad[0];
                    }
                }
            }
            OpRecord::AddN { parts } => {
                for p in parts {
                    if ensure_grad(nodes, *p) {
                        let g = nodes[p.0].grad.as_mut().expect("grad");
                        for (gi, &di) in g.iter_mut().zip(grad) {
                            *gi += di;
                        }
                    }
                }
            }
        },
    }
    nodes[i].src = src;
}

// ── parameters ──────────────────────────────────────────────────────

/// Identifier of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    data: Arc<Vec<f64>>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named learnable parameters, shared read-only with tapes during forward
/// passes and mutated only between passes (the optimizer step).
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(
            data.len(),
            rows * cols,
            "param {name}: data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        assert!(
            !self.by_name.contains_key(name),
            "param {name} registered twice"
        );
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            grad: vec![0.0; data.len()],
            data: Arc::new(data),
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> ParamId {
        ParamId(
            *self
                .by_name
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Mutable view of a parameter's values. Panics if any tape still
    /// shares the buffer; updates must happen between forward passes.
    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::get_mut(&mut self.params[id.0].data)
            .expect("parameter buffer still shared with a live tape")
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Accumulate `grads` (keyed by raw param index) into the store,
    /// scaled by `scale`.
    pub fn accumulate(&mut self, grads: &HashMap<usize, Vec<f64>>, scale: f64) {
        for (&id, g) in grads {
            for (acc, &v) in self.params[id].grad.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, finite_diff_check};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.constant(2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let t = Tape::new();
        let a = t.constant(1, 1, vec![2.0]);
        let b = t.constant(1, 1, vec![5.0]);
        assert_eq!(t.value(t.matmul(a, b)), vec![10.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions differ")]
    fn matmul_shape_mismatch_names_shapes() {
        let t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 2, vec![0.0; 4]);
        t.matmul(a, b);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let a0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_rel = finite_diff_check(&[(3, 4, a0), (4, 2, b0)], |t, vars| {
            let c = t.matmul(vars[0], vars[1]);
            // Squaring keeps the readout sensitive to every entry's sign.
            let sq = t.mul(c, c);
            t.gather_sum(sq, &(0..6).collect::<Vec<_>>())
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn elementwise_values() {
        let t = Tape::new();
        let x = t.constant(1, 2, vec![0.0, 0.0]);
        assert_eq!(t.value(t.tanh(x))[0], 0.0);
        assert_eq!(t.value(t.sigmoid(x))[0], 0.5);
    }

    #[test]
    #[should_panic(expected = "operand shapes differ")]
    fn elementwise_shape_mismatch() {
        let t = Tape::new();
        let a = t.constant(1, 2, vec![0.0; 2]);
        let b = t.constant(1, 3, vec![0.0; 3]);
        t.add(a, b);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let max_rel = finite_diff_check(&[(1, 1, vec![0.3])], |t, vars| {
            let y = t.tanh(vars[0]);
            t.gather_sum(y, &[0])
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn gather_rows_first_row() {
        let t = Tape::new();
        let table = t.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t.gather_rows(table, &[0]);
        assert_eq!(t.value(r), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gather_rows_repeated_ids_accumulate() {
        let t = Tape::new();
        let table = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.gather_rows(table, &[1, 1]);
        let s = t.gather_sum(r, &[0, 1, 2, 3]);
        t.backward(s);
        // Both gathered copies of row 1 contribute; row 0 untouched.
        assert_eq!(t.grad(table).unwrap(), vec![0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn gather_rows_out_of_range() {
        let t = Tape::new();
        let table = t.constant(2, 2, vec![0.0; 4]);
        t.gather_rows(table, &[2]);
    }

    #[test]
    fn gather_rows_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let table: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_rel = finite_diff_check(&[(5, 3, table)], |t, vars| {
            let r = t.gather_rows(vars[0], &[0, 2, 2, 4]);
            let sq = t.mul(r, r);
            t.gather_sum(sq, &(0..12).collect::<Vec<_>>())
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let t = Tape::new();
        let w = t.leaf(1, 2, vec![1.0, 2.0]);
        let sq = t.mul(w, w);
        let loss = t.gather_sum(sq, &[0, 1]);
        t.backward(loss);
        assert_eq!(t.grad(w).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_has_no_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", 1, 1, vec![2.0]);
        let unused = store.add("unused", 1, 1, vec![3.0]);
        let t = Tape::new();
        let w = t.param(&store, used);
        let _lonely = t.param(&store, unused);
        let loss = t.mul(w, w);
        t.backward(loss);
        t.fold_param_grads(&mut store);
        assert_eq!(store.get(used).grad, vec![4.0]);
        assert_eq!(store.get(unused).grad, vec![0.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be a scalar")]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        t.backward(x);
    }

    #[test]
    #[should_panic(expected = "already consumed")]
    fn backward_twice_panics() {
        let t = Tape::new();
        let x = t.leaf(1, 1, vec![1.0]);
        let y = t.mul(x, x);
        t.backward(y);
        t.backward(y);
    }

    #[test]
    fn backward_is_additive_across_tapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 2, vec![0.5, -1.5]);

        let run = |store: &mut ParamStore, scale: f64| {
            let t = Tape::new();
            let v = t.param(store, w);
            let sq = t.mul(v, v);
            let s = t.gather_sum(sq, &[0, 1]);
            let loss = t.scale(s, scale);
            t.backward(loss);
            t.fold_param_grads(store);
        };

        run(&mut store, 1.0);
        run(&mut store, 2.0);
        let accumulated = store.get(w).grad.clone();

        store.zero_grads();
        run(&mut store, 3.0);
        assert_close(&accumulated, &store.get(w).grad, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t.constant(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = t.value(t.softmax(x));
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_ops_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_rel = finite_diff_check(&[(2, 3, x), (3, 3, w), (1, 3, b)], |t, vars| {
            let h = t.add_bias(t.matmul(vars[0], vars[1]), vars[2]);
            let h = t.tanh(h);
            let p = t.softmax(h);
            let picked = t.gather_sum(p, &[0, 4]);
            t.ln(picked)
        });
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn slice_concat_stack_gradients() {
        let mut rng = StdRng::seed_from_u64(5);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_rel = finite_diff_check(&[(1, 8, a)], |t, vars| {
            let lo = t.slice_cols(vars[0], 0, 4);
            let hi = t.slice_cols(vars[0], 4, 4);
            let prod = t.mul(lo, hi);
            let stacked = t.stack_rows(&[prod, lo]);
            let flat = t.concat_cols(&[stacked]);
            let sq = t.mul(flat, flat);
            t.gather_sum(sq, &(0..8).collect::<Vec<_>>())
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(9);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let av = t.constant(2, 3, a.clone());
        let bv = t.constant(2, 3, b.clone());
        let c = t.value(t.matmul_nt(av, bv));
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert!((c[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let t = Tape::new();
            let x = t.constant(2, 2, vec![0.3, -0.7, 1.1, 0.0]);
            let y = t.sigmoid(t.matmul(x, x));
            t.value(y)
        };
        assert_eq!(run(), run());
    }
}
